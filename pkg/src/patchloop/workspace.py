"""Repository workspace and the tool surface the agent drives.

Every tool returns a :class:`ToolResult` instead of raising, so the agent
loop can relay failures back to the model as recoverable observations. All
tools are confined to the workspace root; ``bash`` is the documented
exception and relies on the host container for confinement, with only a
timeout and an output cap enforced here.

Snapshots are git tree objects built through a throwaway index, plus manual
deletion of files created after the snapshot, so rollback restores the
working tree byte-identically including removals.
"""

from __future__ import annotations

import json
import os
import re
import select
import subprocess
import tempfile
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path

from .errors import WorkspaceError

DEFAULT_OUTPUT_CAP = 20_000
DEFAULT_BASH_TIMEOUT = 300.0
DEFAULT_LOG_BUDGET = 4_000
DEFAULT_SEARCH_LIMIT = 5
DEFAULT_SEARCH_CONTEXT = 2

TOOL_NAMES = frozenset(
    {"view", "search", "create", "str_replace", "bash", "check_vul",
     "log_compress", "iter_grep", "submit"}
)

# ToolResult.error_kind values
NOT_FOUND = "NotFound"
OUTSIDE_WORKSPACE = "OutsideWorkspace"
ALREADY_EXISTS = "AlreadyExists"
NO_MATCH = "NoMatch"
AMBIGUOUS_MATCH = "AmbiguousMatch"
BAD_PATTERN = "BadPattern"
TIMEOUT = "Timeout"
SESSION_DEAD = "SessionDead"
SNAPSHOT_MISSING = "SnapshotMissing"


@dataclass
class ToolCall:
    name: str
    args: dict[str, str]

    def to_json(self) -> dict:
        return {"name": self.name, "args": dict(self.args)}


@dataclass
class ToolResult:
    ok: bool
    output: str
    error_kind: str | None = None

    def to_json(self) -> dict:
        rec: dict = {"ok": self.ok, "output": self.output}
        if self.error_kind is not None:
            rec["error_kind"] = self.error_kind
        return rec


def tool_log_record(call: ToolCall, result: ToolResult) -> dict:
    """Uniform envelope used in trajectory logs and scripted transcripts."""
    return {"call": call.to_json(), "result": result.to_json()}


def cap_output(text: str, cap: int = DEFAULT_OUTPUT_CAP) -> str:
    """Bound tool output, preserving head and tail around a truncation note."""
    if len(text) <= cap:
        return text
    note = f"\n... [output truncated: {len(text) - cap} chars omitted] ...\n"
    keep = max(0, cap - len(note))
    head = text[: keep // 2]
    tail = text[len(text) - (keep - keep // 2) :]
    return head + note + tail


class _Escape(Exception):
    """Internal: path resolved outside the workspace root."""


class PersistentShell:
    """One long-lived bash process; cwd and environment persist across calls."""

    def __init__(self, cwd: Path, timeout: float = DEFAULT_BASH_TIMEOUT) -> None:
        self.cwd = Path(cwd)
        self.timeout = timeout
        self._proc: subprocess.Popen | None = None

    def _spawn(self) -> None:
        self._proc = subprocess.Popen(
            ["/bin/bash"],
            cwd=self.cwd,
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            stderr=subprocess.STDOUT,
            text=False,
        )
        os.set_blocking(self._proc.stdout.fileno(), False)

    @property
    def alive(self) -> bool:
        return self._proc is not None and self._proc.poll() is None

    def restart(self) -> None:
        self.close()
        self._spawn()

    def close(self) -> None:
        if self._proc is not None:
            try:
                self._proc.kill()
                self._proc.wait(timeout=5)
            except OSError:
                pass
            self._proc = None

    def run(self, command: str, timeout: float | None = None) -> tuple[bool, str, str | None]:
        """Returns (ok, output, error_kind). Timeout kills and respawns the shell."""
        if not self.alive:
            return False, "shell session is not running", SESSION_DEAD
        timeout = self.timeout if timeout is None else timeout
        marker = f"__DONE_{uuid.uuid4().hex}__"
        script = f"{command}\nprintf '\\n%s %s\\n' {marker} $?\n"
        try:
            self._proc.stdin.write(script.encode("utf-8"))
            self._proc.stdin.flush()
        except (BrokenPipeError, OSError):
            self._proc = None
            return False, "shell session died", SESSION_DEAD

        deadline = time.monotonic() + timeout
        chunks: list[bytes] = []
        fd = self._proc.stdout.fileno()
        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                self.restart()
                return False, f"command timed out after {timeout:.0f}s", TIMEOUT
            ready, _, _ = select.select([fd], [], [], min(remaining, 0.2))
            if not ready:
                if self._proc.poll() is not None:
                    self._proc = None
                    return False, "shell session died", SESSION_DEAD
                continue
            data = self._proc.stdout.read()
            if data:
                chunks.append(data)
            buf = b"".join(chunks)
            idx = buf.find(marker.encode())
            if idx >= 0:
                output = buf[:idx].decode("utf-8", errors="replace")
                tail = buf[idx:].decode("utf-8", errors="replace")
                m = re.search(rf"{marker} (\d+)", tail)
                code = int(m.group(1)) if m else 1
                # drop the newline our printf prepended
                if output.endswith("\n"):
                    output = output[:-1]
                return code == 0, output, None


@dataclass
class CompressedContext:
    """Fixed three-field summary of a failed attempt fed to the next one."""

    visited: list[tuple[str, tuple[int, int]]] = field(default_factory=list)
    applied_hunks: list[str] = field(default_factory=list)
    failure_log: str = ""
    budget: int = DEFAULT_LOG_BUDGET

    def render(self) -> str:
        visited_text = "\n".join(f"{f}:{s}-{e}" for f, (s, e) in self.visited)
        hunks_text = "\n".join(self.applied_hunks)
        body_budget = self.budget - 120  # headroom for the three section headers
        sections = [
            ("[visited files/line ranges]", _truncate(visited_text, body_budget // 5)),
            ("[applied diff hunks]", _truncate(hunks_text, (body_budget * 3) // 10)),
            ("[verification failure log]", _truncate(self.failure_log, body_budget // 2)),
        ]
        text = "\n".join(f"{header}\n{body}" for header, body in sections)
        return text[: self.budget]


def _truncate(text: str, budget: int) -> str:
    if len(text) <= budget:
        return text
    marker = "\n[truncated]"
    return text[: max(0, budget - len(marker))] + marker


_DIAG_RE = re.compile(r"(ERROR|FAILED|FAIL\b|error:|Assertion|SUMMARY|Traceback)")
_FRAME_LINE_RE = re.compile(r"^\s*#\d+\s")


def extract_failure_log(raw_logs: str, max_frames: int = 8) -> str:
    """Keep the first diagnostic line, up to `max_frames` stack frames, and
    failing-test lines; everything else is noise for the next iteration."""
    lines = raw_logs.splitlines()
    picked: list[str] = []
    diag = next((l for l in lines if _DIAG_RE.search(l)), None)
    if diag is not None:
        picked.append(diag.strip())
    frames = [l.rstrip() for l in lines if _FRAME_LINE_RE.match(l)][:max_frames]
    picked.extend(frames)
    fails = [l.strip() for l in lines if l.strip().startswith("FAIL")][:5]
    for l in fails:
        if l not in picked:
            picked.append(l)
    return "\n".join(picked)


def log_compress(
    raw_logs: str,
    visited: list[tuple[str, tuple[int, int]]] | None = None,
    applied_hunks: list[str] | None = None,
    budget: int = DEFAULT_LOG_BUDGET,
) -> CompressedContext:
    """Build the three-field compressed context from an attempt's raw logs."""
    return CompressedContext(
        visited=list(visited or []),
        applied_hunks=list(applied_hunks or []),
        failure_log=extract_failure_log(raw_logs),
        budget=budget,
    )


class Workspace:
    """A version-controlled checkout plus a persistent shell session."""

    def __init__(
        self,
        root: Path,
        bash_timeout: float = DEFAULT_BASH_TIMEOUT,
        output_cap: int = DEFAULT_OUTPUT_CAP,
    ) -> None:
        self.root = Path(root).resolve()
        if not self.root.is_dir():
            raise WorkspaceError(f"workspace root does not exist: {self.root}")
        if not (self.root / ".git").exists():
            raise WorkspaceError(f"workspace root is not a git checkout: {self.root}")
        self.output_cap = output_cap
        self.snapshot_id: str | None = None
        self._snapshot_trees: dict[str, list[str]] = {}
        self._snapshot_stats: dict[str, dict[str, tuple[int, int]]] = {}
        self._shell = PersistentShell(self.root, timeout=bash_timeout)
        self._shell._spawn()

    def close(self) -> None:
        self._shell.close()

    # -- path confinement ---------------------------------------------------

    def _resolve(self, path: str) -> Path:
        candidate = (self.root / path).resolve()
        if candidate != self.root and self.root not in candidate.parents:
            raise _Escape(path)
        return candidate

    # -- git plumbing ---------------------------------------------------------

    def _git(self, *args: str, env: dict | None = None, check: bool = True) -> str:
        full_env = dict(os.environ)
        if env:
            full_env.update(env)
        proc = subprocess.run(
            ["git", *args],
            cwd=self.root,
            env=full_env,
            capture_output=True,
            text=True,
        )
        if check and proc.returncode != 0:
            raise WorkspaceError(f"git {' '.join(args)} failed: {proc.stderr.strip()}")
        return proc.stdout

    def snapshot(self) -> str:
        """Capture the full working tree (tracked and untracked) as a git tree."""
        with tempfile.TemporaryDirectory(prefix="pl-git-") as td:
            env = {"GIT_INDEX_FILE": str(Path(td) / "index")}
            self._git("add", "-A", env=env)
            tree = self._git("write-tree", env=env).strip()
        self.snapshot_id = tree
        files = self._git("ls-tree", "-r", "--name-only", tree).splitlines()
        self._snapshot_trees[tree] = files
        self._snapshot_stats[tree] = {p: self._stat(p) for p in files}
        return tree

    def _stat(self, rel: str) -> tuple[int, int]:
        try:
            st = (self.root / rel).stat()
            return (st.st_size, st.st_mtime_ns)
        except OSError:
            return (-1, -1)

    def rollback(self, snapshot_id: str) -> ToolResult:
        """Restore the working tree byte-identically to a prior snapshot."""
        if snapshot_id not in self._snapshot_trees:
            probe = subprocess.run(
                ["git", "cat-file", "-t", snapshot_id],
                cwd=self.root, capture_output=True, text=True,
            )
            if probe.returncode != 0 or probe.stdout.strip() != "tree":
                return ToolResult(False, f"unknown snapshot {snapshot_id}", SNAPSHOT_MISSING)
            self._snapshot_trees[snapshot_id] = self._git(
                "ls-tree", "-r", "--name-only", snapshot_id
            ).splitlines()
        snap_files = set(self._snapshot_trees[snapshot_id])
        for path in self._walk_files():
            if path not in snap_files:
                (self.root / path).unlink()
        self._prune_empty_dirs()
        # Restore only files whose size or mtime drifted since the snapshot
        # (git's own racy-clean heuristic); unknown stats force a full restore.
        stats = self._snapshot_stats.get(snapshot_id)
        if stats is None:
            changed = sorted(snap_files)
        else:
            changed = sorted(p for p in snap_files if self._stat(p) != stats[p])
        if changed:
            self._git("checkout", snapshot_id, "--", *changed)
            if stats is not None:
                for path in changed:
                    stats[path] = self._stat(path)
        self.snapshot_id = snapshot_id
        return ToolResult(True, f"restored snapshot {snapshot_id[:12]}")

    def submit(self, base_snapshot: str | None = None) -> str:
        """Unified diff of the current tree against a snapshot (default: last)."""
        base = base_snapshot or self.snapshot_id
        if base is None:
            raise WorkspaceError("no snapshot to diff against")
        current = self.snapshot()
        if current == base:
            self.snapshot_id = base
            return ""
        diff = self._git("diff", base, current)
        self.snapshot_id = base
        return diff

    def file_at_snapshot(self, snapshot_id: str, path: str) -> str | None:
        proc = subprocess.run(
            ["git", "cat-file", "-p", f"{snapshot_id}:{path}"],
            cwd=self.root, capture_output=True, text=True,
        )
        return proc.stdout if proc.returncode == 0 else None

    def _walk_files(self) -> list[str]:
        out = []
        for path in self.root.rglob("*"):
            if path.is_file() and ".git" not in path.parts:
                out.append(path.relative_to(self.root).as_posix())
        return out

    def _prune_empty_dirs(self) -> None:
        for path in sorted(
            (p for p in self.root.rglob("*") if p.is_dir() and ".git" not in p.parts),
            key=lambda p: len(p.parts),
            reverse=True,
        ):
            try:
                path.rmdir()
            except OSError:
                pass

    # -- tools ----------------------------------------------------------------

    def view(self, path: str, window: tuple[int, int] | None = None) -> ToolResult:
        """File contents with 1-based line numbers, or a depth-2 directory listing."""
        try:
            target = self._resolve(path)
        except _Escape:
            return ToolResult(False, f"{path} is outside the workspace", OUTSIDE_WORKSPACE)
        if target.is_dir():
            return ToolResult(True, cap_output(self._list_dir(target), self.output_cap))
        if not target.is_file():
            return ToolResult(False, f"no such file: {path}", NOT_FOUND)
        lines = target.read_text(encoding="utf-8", errors="replace").splitlines()
        start, end = 1, len(lines)
        if window is not None:
            start = max(1, window[0])
            end = min(len(lines), window[1])
        numbered = "\n".join(f"{i:6}\t{lines[i - 1]}" for i in range(start, end + 1))
        return ToolResult(True, cap_output(numbered, self.output_cap))

    def _list_dir(self, target: Path) -> str:
        rows = []
        for child in sorted(target.iterdir()):
            if child.name == ".git":
                continue
            rows.append(child.name + ("/" if child.is_dir() else ""))
            if child.is_dir():
                for grand in sorted(child.iterdir()):
                    if grand.name == ".git":
                        continue
                    rows.append("  " + grand.name + ("/" if grand.is_dir() else ""))
        return "\n".join(rows)

    def search(
        self,
        pattern: str,
        search_path: str = ".",
        limit: int = DEFAULT_SEARCH_LIMIT,
        context: int = DEFAULT_SEARCH_CONTEXT,
        per_file_limit: bool = False,
    ) -> ToolResult:
        """Regex search with context lines; `limit` is global unless
        `per_file_limit` is set."""
        try:
            compiled = re.compile(pattern)
        except re.error as exc:
            return ToolResult(False, f"bad pattern: {exc}", BAD_PATTERN)
        try:
            target = self._resolve(search_path)
        except _Escape:
            return ToolResult(False, f"{search_path} is outside the workspace", OUTSIDE_WORKSPACE)
        if not target.exists():
            return ToolResult(False, f"no such path: {search_path}", NOT_FOUND)

        files = [target] if target.is_file() else [
            p for p in sorted(target.rglob("*")) if p.is_file() and ".git" not in p.parts
        ]
        blocks: list[str] = []
        total = 0
        truncated = False
        for path in files:
            rel = path.relative_to(self.root).as_posix()
            try:
                data = path.read_bytes()
            except OSError:
                continue
            if b"\x00" in data:
                continue
            lines = data.decode("utf-8", errors="replace").splitlines()
            shown_in_file = 0
            for lineno, line in enumerate(lines, 1):
                if not compiled.search(line):
                    continue
                total += 1
                budget_hit = (
                    shown_in_file >= limit if per_file_limit else len(blocks) >= limit
                )
                if budget_hit:
                    truncated = True
                    continue
                shown_in_file += 1
                lo = max(1, lineno - context)
                hi = min(len(lines), lineno + context)
                body = "\n".join(
                    f"{'>' if i == lineno else ' '}{i:5}: {lines[i - 1]}"
                    for i in range(lo, hi + 1)
                )
                blocks.append(f"== {rel}:{lineno} ==\n{body}")
        out = "\n".join(blocks) if blocks else "(no matches)"
        if truncated:
            out += f"\n({total - len(blocks)} more matches not shown)"
        return ToolResult(True, cap_output(out, self.output_cap))

    def create(self, path: str, text: str) -> ToolResult:
        try:
            target = self._resolve(path)
        except _Escape:
            return ToolResult(False, f"{path} is outside the workspace", OUTSIDE_WORKSPACE)
        if target.exists():
            return ToolResult(False, f"path already exists: {path}", ALREADY_EXISTS)
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(text, encoding="utf-8")
        return ToolResult(True, f"created {path} ({len(text)} chars)")

    def str_replace(self, path: str, old: str, new: str) -> ToolResult:
        """Replace an exact, unique occurrence; the file is untouched on error."""
        try:
            target = self._resolve(path)
        except _Escape:
            return ToolResult(False, f"{path} is outside the workspace", OUTSIDE_WORKSPACE)
        if not target.is_file():
            return ToolResult(False, f"no such file: {path}", NOT_FOUND)
        content = target.read_text(encoding="utf-8", errors="replace")
        count = content.count(old)
        if count == 0:
            return ToolResult(False, f"old text not found in {path}", NO_MATCH)
        if count > 1:
            return ToolResult(False, f"old text occurs {count} times in {path}", AMBIGUOUS_MATCH)
        target.write_text(content.replace(old, new, 1), encoding="utf-8")
        return ToolResult(True, f"replaced 1 occurrence in {path}")

    def bash(self, command: str, restart: bool = False, timeout: float | None = None) -> ToolResult:
        if restart:
            self._shell.restart()
        ok, output, error_kind = self._shell.run(command, timeout=timeout)
        output = cap_output(output, self.output_cap)
        if error_kind is not None:
            return ToolResult(False, output, error_kind)
        return ToolResult(ok, output, None if ok else "NonZeroExit")
