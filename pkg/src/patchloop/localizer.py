"""Structure-aware fault localization.

Builds a symbol index over the repository (definition and use sites), parses
sanitizer-style crash reports into ordered frames, and ranks the sites of a
queried symbol by proximity to the crash: sites inside crash-stack files
come first, ordered by frame depth and line distance, then definitions
before uses, then stable path/line order.

C/C++ sources get a lightweight declaration-aware parser and Python uses
the stdlib ``ast``; every other text file falls back to word-boundary
lexical matching (all sites flagged as uses).
"""

from __future__ import annotations

import ast
import logging
import re
from dataclasses import dataclass
from pathlib import Path

from .errors import IndexFailure, NoMatch

logger = logging.getLogger(__name__)

DEFINITION = "definition"
USE = "use"

DEFAULT_K = 5
DEFAULT_CONTEXT_RADIUS = 10
MAX_INDEXED_BYTES = 2 * 1024 * 1024

_IDENT_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")

_C_KEYWORDS = frozenset(
    """auto break case char const continue default do double else enum extern
    float for goto if inline int long register restrict return short signed
    sizeof static struct switch typedef union unsigned void volatile while
    bool true false nullptr new delete class namespace template typename
    public private protected virtual operator this using""".split()
)

_C_EXTENSIONS = {".c", ".h", ".cc", ".cpp", ".cxx", ".hpp", ".hh", ".hxx"}


@dataclass(frozen=True)
class SymbolSite:
    file: str
    line: int
    kind: str  # DEFINITION or USE
    symbol: str


@dataclass(frozen=True)
class CrashFrame:
    file: str
    line: int
    function: str


@dataclass
class CrashReport:
    frames: list[CrashFrame]
    fault_kind: str
    raw: str


@dataclass
class LocalizationObject:
    file: str
    line_range: tuple[int, int]
    reason: str
    rank: int

    def to_json(self) -> dict:
        return {
            "file": self.file,
            "line_start": self.line_range[0],
            "line_end": self.line_range[1],
            "rank": self.rank,
            "reason": self.reason,
        }


# ---------------------------------------------------------------------------
# Crash report parsing
# ---------------------------------------------------------------------------

_FRAME_RE = re.compile(
    r"^\s*#(\d+)\s+0x[0-9a-fA-F]+\s+in\s+(.+?)\s+(\S+?):(\d+)(?::\d+)?\s*$"
)
_FAULT_RE = re.compile(r"ERROR:\s*\w*Sanitizer:?\s*([A-Za-z0-9_-]+)")


def parse_crash_report(text: str) -> CrashReport | None:
    """Extract ordered frames from sanitizer-style ``#N 0x... in f file:line`` lines.

    Frames without a source location (module+offset form) are skipped.
    Returns None when no frame can be extracted.
    """
    frames: list[CrashFrame] = []
    for line in text.splitlines():
        m = _FRAME_RE.match(line)
        if m:
            frames.append(
                CrashFrame(file=m.group(3), line=int(m.group(4)), function=m.group(2))
            )
    if not frames:
        return None
    fault = _FAULT_RE.search(text)
    return CrashReport(
        frames=frames,
        fault_kind=fault.group(1) if fault else "unknown",
        raw=text,
    )


# ---------------------------------------------------------------------------
# Per-language symbol extraction
# ---------------------------------------------------------------------------


def _strip_c_noise(line: str) -> str:
    """Blank out string/char literals and line comments; length-preserving."""
    out = []
    i = 0
    n = len(line)
    while i < n:
        ch = line[i]
        if ch in ("\"", "'"):
            out.append(" ")
            i += 1
            while i < n and line[i] != ch:
                if line[i] == "\\":
                    out.append("  ")
                    i += 2
                    continue
                out.append(" ")
                i += 1
            if i < n:
                out.append(" ")
                i += 1
        elif ch == "/" and i + 1 < n and line[i + 1] == "/":
            break
        else:
            out.append(ch)
            i += 1
    return "".join(out)


_C_FUNC_DEF_RE = re.compile(
    r"^\s*(?:[A-Za-z_][\w:<>,\s\*&]*?[\s\*&])?([A-Za-z_]\w*)\s*\(([^;]*)\)\s*\{"
)
_C_DECL_RE = re.compile(
    r"^\s*(?:const\s+|static\s+|unsigned\s+|signed\s+|struct\s+|register\s+|volatile\s+)*"
    r"[A-Za-z_]\w*(?:\s*\*+\s*|\s+)([A-Za-z_]\w*)\s*(?:=|;|\[)"
)
_C_CONTROL = frozenset({"if", "for", "while", "switch", "return", "else", "do", "sizeof"})


def _c_param_names(arglist: str) -> list[str]:
    """Last identifier of each comma-separated parameter declaration."""
    names = []
    depth = 0
    current = []
    parts = []
    for ch in arglist:
        if ch in "(<[":
            depth += 1
        elif ch in ")>]":
            depth -= 1
        if ch == "," and depth == 0:
            parts.append("".join(current))
            current = []
        else:
            current.append(ch)
    parts.append("".join(current))
    for part in parts:
        tokens = _IDENT_RE.findall(part)
        idents = [t for t in tokens if t not in _C_KEYWORDS]
        if not idents:
            continue  # e.g. bare "void"
        # a type precedes the name: another identifier, a keyword, or a '*'
        if len(idents) >= 2 or len(tokens) > len(idents) or "*" in part:
            names.append(idents[-1])
    return names


def _extract_c_sites(text: str, path: str) -> list[SymbolSite]:
    sites: dict[tuple[str, int, str], str] = {}  # (file, line, symbol) -> kind
    in_block_comment = False
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw
        if in_block_comment:
            end = line.find("*/")
            if end < 0:
                continue
            line = " " * (end + 2) + line[end + 2 :]
            in_block_comment = False
        start = line.find("/*")
        while start >= 0:
            end = line.find("*/", start + 2)
            if end < 0:
                line = line[:start]
                in_block_comment = True
                break
            line = line[:start] + " " * (end + 2 - start) + line[end + 2 :]
            start = line.find("/*")
        line = _strip_c_noise(line)
        if line.lstrip().startswith("#"):
            continue

        definitions: set[str] = set()
        m = _C_FUNC_DEF_RE.match(line)
        if m and m.group(1) not in _C_CONTROL:
            definitions.add(m.group(1))
            definitions.update(_c_param_names(m.group(2)))
        else:
            m = _C_DECL_RE.match(line)
            if m and m.group(1) not in _C_KEYWORDS:
                definitions.add(m.group(1))

        for token in _IDENT_RE.findall(line):
            if token in _C_KEYWORDS:
                continue
            kind = DEFINITION if token in definitions else USE
            key = (path, lineno, token)
            if sites.get(key) != DEFINITION:
                sites[key] = kind
    return [SymbolSite(f, l, k, s) for (f, l, s), k in sites.items()]


def _extract_python_sites(text: str, path: str) -> list[SymbolSite]:
    tree = ast.parse(text)
    sites: dict[tuple[str, int, str], str] = {}

    def put(line: int, symbol: str, kind: str) -> None:
        key = (path, line, symbol)
        if sites.get(key) != DEFINITION:
            sites[key] = kind

    for node in ast.walk(tree):
        if isinstance(node, (ast.FunctionDef, ast.AsyncFunctionDef, ast.ClassDef)):
            put(node.lineno, node.name, DEFINITION)
            if isinstance(node, (ast.FunctionDef, ast.AsyncFunctionDef)):
                args = node.args
                for arg in args.args + args.posonlyargs + args.kwonlyargs:
                    put(arg.lineno, arg.arg, DEFINITION)
        elif isinstance(node, ast.Name):
            kind = DEFINITION if isinstance(node.ctx, ast.Store) else USE
            put(node.lineno, node.id, kind)
        elif isinstance(node, ast.Attribute):
            put(node.lineno, node.attr, USE)
    return [SymbolSite(f, l, k, s) for (f, l, s), k in sites.items()]


def _extract_lexical_sites(text: str, path: str) -> list[SymbolSite]:
    """Fallback for files without a registered grammar: every token is a use."""
    seen: set[tuple[int, str]] = set()
    sites = []
    for lineno, line in enumerate(text.splitlines(), 1):
        for token in _IDENT_RE.findall(line):
            if (lineno, token) not in seen:
                seen.add((lineno, token))
                sites.append(SymbolSite(path, lineno, USE, token))
    return sites


def _grammar_for(path: Path):
    suffix = path.suffix.lower()
    if suffix in _C_EXTENSIONS:
        return _extract_c_sites
    if suffix == ".py":
        return _extract_python_sites
    return None


# ---------------------------------------------------------------------------
# Repository index
# ---------------------------------------------------------------------------


class SymbolIndex:
    def __init__(
        self,
        files: dict[str, int] | None = None,
        sites: dict[str, list[SymbolSite]] | None = None,
    ) -> None:
        self.files = files or {}  # rel path -> line count
        self._sites = sites or {}  # symbol -> sorted sites

    def sites(self, symbol: str) -> list[SymbolSite]:
        return list(self._sites.get(symbol, ()))

    def line_count(self, file: str) -> int:
        return self.files.get(file, 0)

    def add(self, site: SymbolSite) -> None:
        self._sites.setdefault(site.symbol, []).append(site)

    def finalize(self) -> None:
        for sites in self._sites.values():
            sites.sort(key=lambda s: (s.file, s.line, s.kind))


def index_repository(root: Path, max_bytes: int = MAX_INDEXED_BYTES) -> SymbolIndex:
    """Index every readable source file under `root` (skips .git and binaries)."""
    root = Path(root)
    if not root.is_dir():
        raise IndexFailure(f"not a readable directory: {root}")
    index = SymbolIndex()
    for path in sorted(root.rglob("*")):
        if not path.is_file() or ".git" in path.parts:
            continue
        try:
            if path.stat().st_size > max_bytes:
                continue
            data = path.read_bytes()
        except OSError as exc:
            logger.warning("skipping unreadable file %s: %s", path, exc)
            continue
        if b"\x00" in data:
            continue
        text = data.decode("utf-8", errors="replace")
        rel = path.relative_to(root).as_posix()
        index.files[rel] = len(text.splitlines())
        grammar = _grammar_for(path)
        try:
            sites = grammar(text, rel) if grammar else _extract_lexical_sites(text, rel)
        except (SyntaxError, ValueError) as exc:
            logger.warning("parse failure in %s, falling back to lexical: %s", rel, exc)
            sites = _extract_lexical_sites(text, rel)
        for site in sites:
            index.add(site)
    index.finalize()
    return index


# ---------------------------------------------------------------------------
# Ranked lookup
# ---------------------------------------------------------------------------


def _frame_matches(site_file: str, frame_file: str) -> bool:
    """Report paths may be absolute; match on exact or path-suffix equality."""
    return frame_file == site_file or frame_file.endswith("/" + site_file)


def _score(site: SymbolSite, report: CrashReport | None) -> tuple:
    kind_rank = 0 if site.kind == DEFINITION else 1
    if report is not None:
        for idx, frame in enumerate(report.frames):
            if _frame_matches(site.file, frame.file):
                return (0, idx, abs(site.line - frame.line), kind_rank, site.file, site.line)
        return (1, 0, 0, kind_rank, site.file, site.line)
    return (0, 0, 0, kind_rank, site.file, site.line)


def _reason(site: SymbolSite, report: CrashReport | None) -> str:
    if report is not None:
        for idx, frame in enumerate(report.frames):
            if _frame_matches(site.file, frame.file):
                dist = abs(site.line - frame.line)
                where = "at the frame line" if dist == 0 else f"{dist} lines from frame line {frame.line}"
                return f"{site.kind} of '{site.symbol}' in crash frame #{idx} file, {where}"
        return f"{site.kind} of '{site.symbol}' outside the crash stack"
    return f"{site.kind} of '{site.symbol}'"


def iter_grep(
    index: SymbolIndex,
    symbol: str,
    report: CrashReport | None = None,
    k: int = DEFAULT_K,
    context_radius: int = DEFAULT_CONTEXT_RADIUS,
) -> list[LocalizationObject]:
    """Return the top-k locations of `symbol`, ranked by crash proximity.

    Raises NoMatch when the symbol has no indexed site. Without a report
    the ranking degrades to (definition-before-use, file, line).
    """
    if not symbol:
        raise NoMatch("empty symbol")
    sites = index.sites(symbol)
    if not sites:
        raise NoMatch(f"no definition or use site for symbol {symbol!r}")
    ranked = sorted(sites, key=lambda s: _score(s, report))[:k]
    results = []
    for rank, site in enumerate(ranked, 1):
        count = index.line_count(site.file) or site.line
        start = max(1, site.line - context_radius)
        end = min(count, site.line + context_radius)
        results.append(
            LocalizationObject(
                file=site.file,
                line_range=(start, max(start, end)),
                reason=_reason(site, report),
                rank=rank,
            )
        )
    return results
