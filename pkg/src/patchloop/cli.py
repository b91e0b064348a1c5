"""Command-line entry points: corpus ingestion, repair runs, localization,
and memory administration.

Exit codes for `repair`: 0 on success, 1 when the attempt budget is
exhausted, 2 on configuration errors (bad task file, unusable workspace,
reproduction command passing on the pristine repo, ...).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

from . import memory
from .agent import RepairTask, SessionRunner
from .config import EngineConfig, build_embedder, load_config
from .errors import (
    CorruptMemoryFile,
    InvariantViolation,
    NoMatch,
    PatchloopError,
    PristineCheckFailed,
    UnreadableCorpus,
    WorkspaceError,
)
from .gateway import build_gateway
from .localizer import index_repository, iter_grep, parse_crash_report
from .memory import (
    CWE_UNKNOWN,
    L1Entry,
    MemoryStore,
    RetrievalKeys,
    insert,
    load_store,
    save_store,
)
from .oracle import OracleRunner, OracleSpec
from .workspace import Workspace

logger = logging.getLogger("patchloop")

CORPUS_FIELDS = ("project", "cwe", "language", "instance_id", "description", "fix_patch")


def _normalize_cwe(raw: str) -> str | None:
    raw = (raw or "").strip()
    if not raw:
        return CWE_UNKNOWN
    if raw.upper().startswith("CWE-"):
        raw = raw[4:]
    return f"CWE-{int(raw)}" if raw.isdigit() else None


def _iter_corpus_rows(path: Path, column_map: dict[str, str]):
    """Yield (lineno, row_dict) from a CSV or JSON-lines corpus."""
    try:
        if path.suffix.lower() == ".csv":
            with path.open("r", encoding="utf-8", newline="") as fh:
                reader = csv.DictReader(fh)
                for lineno, row in enumerate(reader, 2):  # 1 is the header
                    yield lineno, row
        else:
            with path.open("r", encoding="utf-8") as fh:
                for lineno, raw in enumerate(fh, 1):
                    if not raw.strip():
                        continue
                    yield lineno, json.loads(raw)
    except (OSError, UnicodeDecodeError) as exc:
        raise UnreadableCorpus(f"cannot read corpus {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UnreadableCorpus(f"corpus {path} has bad JSON: {exc}") from exc


def ingest(
    corpus_file: Path,
    memory_file: Path,
    column_map: dict[str, str] | None = None,
    store: MemoryStore | None = None,
) -> tuple[int, int, int]:
    """Load corpus rows as historical-fix entries; returns (inserted, merged, rejected)."""
    column_map = column_map or {}
    store = store if store is not None else load_store(memory_file)
    inserted = merged = rejected = 0
    for lineno, row in _iter_corpus_rows(Path(corpus_file), column_map):
        mapped = {f: str(row.get(column_map.get(f, f), "") or "") for f in CORPUS_FIELDS}
        cwe = _normalize_cwe(mapped["cwe"])
        if cwe is None:
            logger.warning("corpus line %d rejected: bad CWE %r", lineno, mapped["cwe"])
            rejected += 1
            continue
        entry = L1Entry(
            keys=RetrievalKeys(
                project=mapped["project"],
                cwe=cwe,
                language=mapped["language"],
                instance_id=mapped["instance_id"],
                description=mapped["description"],
            ),
            fix_patch=mapped["fix_patch"],
        )
        try:
            outcome = insert(store, entry)
        except InvariantViolation as exc:
            logger.warning("corpus line %d rejected: %s", lineno, exc)
            rejected += 1
            continue
        if outcome == memory.InsertOutcome.INSERTED:
            inserted += 1
        else:
            merged += 1
    save_store(store, Path(memory_file))
    return inserted, merged, rejected


def _load_task(task_file: Path) -> dict:
    task = json.loads(Path(task_file).read_text(encoding="utf-8"))
    for required in ("repo", "poc_command", "regression_command", "instance_id"):
        if required not in task:
            raise KeyError(f"task file missing field {required!r}")
    return task


def repair_one(
    task_file: Path,
    memory_file: Path,
    cfg: EngineConfig,
    out_dir: Path,
    store: MemoryStore | None = None,
) -> tuple[int, Path]:
    """Run one repair session; writes report.json and trajectory.jsonl.

    When `store` is provided the caller owns persistence (used by the
    multi-task runner so one shared store serializes all writes).
    """
    task_data = _load_task(task_file)
    workspace = Workspace(
        Path(task_data["repo"]),
        bash_timeout=cfg.bash_timeout,
        output_cap=cfg.tool_output_cap,
    )
    spec = OracleSpec(
        poc_command=task_data["poc_command"],
        regression_command=task_data["regression_command"],
        build_command=task_data.get("build_command"),
        pass_predicates=task_data.get("pass_predicates", {}),
    )
    spec.validate()
    oracle = OracleRunner(
        workspace.root, spec,
        command_timeout=cfg.oracle.command_timeout,
        total_budget=cfg.oracle.total_budget,
    )
    keys = RetrievalKeys(
        project=task_data.get("project", ""),
        cwe=task_data.get("cwe", CWE_UNKNOWN),
        language=task_data.get("language", ""),
        instance_id=task_data["instance_id"],
        description=task_data.get("description", ""),
    )
    task = RepairTask(
        workspace=workspace,
        oracle=oracle,
        keys=keys,
        ground_truth_files=task_data.get("ground_truth_files"),
    )
    owns_store = store is None
    if owns_store:
        store = load_store(Path(memory_file), embedder=build_embedder(cfg.retrieval))
    gateway_cfg = cfg.gateway
    if task_data.get("transcript"):  # per-task replay for scripted batch runs
        gateway_cfg = replace(gateway_cfg, transcript=str(task_data["transcript"]))
    gateway = build_gateway(gateway_cfg)

    runner = SessionRunner(task, store, gateway, cfg.limits)
    try:
        report = runner.run()
    finally:
        workspace.close()
    if owns_store:
        save_store(store, Path(memory_file))

    out_dir.mkdir(parents=True, exist_ok=True)
    stem = task_file.stem
    report_path = out_dir / f"{stem}.report.json"
    report_path.write_text(json.dumps(report.to_json(), indent=2), encoding="utf-8")
    with (out_dir / f"{stem}.trajectory.jsonl").open("w", encoding="utf-8") as fh:
        for record in runner.trajectory:
            fh.write(json.dumps(record) + "\n")
    return (0 if report.outcome == "success" else 1), report_path


def _cmd_ingest(args, cfg: EngineConfig) -> int:
    inserted, merged, rejected = ingest(
        Path(args.corpus), Path(args.memory), cfg.ingest_column_map
    )
    if args.json:
        print(json.dumps({"inserted": inserted, "merged": merged, "rejected": rejected}))
    else:
        print(f"inserted={inserted} merged={merged} rejected={rejected}")
    return 0


def _cmd_repair(args, cfg: EngineConfig) -> int:
    out_dir = Path(args.out)
    if args.tasks:
        task_files = sorted(Path(args.tasks).glob("*.json"))
        if not task_files:
            print(f"no task files under {args.tasks}", file=sys.stderr)
            return 2
        # One shared store: session writes are serialized by its writer lock.
        store = load_store(Path(args.memory), embedder=build_embedder(cfg.retrieval))
        results: dict[str, int] = {}
        with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
            futures = {
                pool.submit(repair_one, tf, Path(args.memory), cfg, out_dir, store): tf
                for tf in task_files
            }
            for future, tf in futures.items():
                try:
                    code, report_path = future.result()
                except PatchloopError as exc:
                    print(f"{tf}: {exc}", file=sys.stderr)
                    results[tf.name] = 2
                    continue
                results[tf.name] = code
                if not args.json:
                    print(f"{tf.name}: exit {code} ({report_path})")
        save_store(store, Path(args.memory))
        if args.json:
            print(json.dumps({"results": results}))
        return max(results.values())
    code, report_path = repair_one(Path(args.task), Path(args.memory), cfg, out_dir)
    if args.json:
        print(json.dumps({"exit": code, "report": str(report_path)}))
    else:
        print(f"exit {code} ({report_path})")
    return code


def _cmd_localize(args, cfg: EngineConfig) -> int:
    index = index_repository(Path(args.repo))
    report = None
    if args.report:
        report = parse_crash_report(Path(args.report).read_text(encoding="utf-8"))
    try:
        objs = iter_grep(index, args.symbol, report, k=args.k)
    except NoMatch as exc:
        print(str(exc), file=sys.stderr)
        print("[]")
        return 0
    print(json.dumps([o.to_json() for o in objs], indent=2))
    return 0


def _cmd_memory_inspect(args, cfg: EngineConfig) -> int:
    store = load_store(Path(args.memory))
    counts = {tier: len(store.tier_entries(tier)) for tier in memory.TIERS}
    rows = []
    for tier in memory.TIERS:
        if args.tier and tier != args.tier:
            continue
        for entry in store.tier_entries(tier):
            keys = entry.keys
            if args.project and keys.project != args.project:
                continue
            if args.cwe and keys.cwe != args.cwe:
                continue
            rows.append(
                {
                    "tier": tier,
                    "instance_id": keys.instance_id,
                    "project": keys.project,
                    "cwe": keys.cwe,
                    "language": keys.language,
                    "description": keys.description[:60],
                }
            )
    if args.json:
        print(json.dumps({"counts": counts, "entries": rows}, indent=2))
    else:
        print(" ".join(f"{tier}={count}" for tier, count in counts.items()))
        for row in rows:
            print(
                f"{row['tier']}  {row['instance_id']:<28} {row['project']:<12} "
                f"{row['cwe']:<10} {row['language']:<6} {row['description']}"
            )
    return 0


def _cmd_memory_prune(args, cfg: EngineConfig) -> int:
    store = load_store(Path(args.memory))
    window = math.inf if args.window in ("inf", "all") else int(args.window)
    removed = memory.prune(store, window)
    save_store(store, Path(args.memory))
    if args.json:
        print(json.dumps({"removed": removed}))
    else:
        print(f"removed={removed}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="patchloop")
    parser.add_argument("--config", help="run configuration file")
    parser.add_argument("--json", action="store_true", help="machine-readable stdout")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="load a fix corpus into memory")
    p.add_argument("corpus")
    p.add_argument("--memory", required=True)
    p.set_defaults(func=_cmd_ingest)

    p = sub.add_parser("repair", help="run a repair session")
    p.add_argument("task", nargs="?", help="task.json file")
    p.add_argument("--tasks", help="directory of task.json files")
    p.add_argument("--memory", required=True)
    p.add_argument("--out", default=".", help="directory for reports")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=_cmd_repair)

    p = sub.add_parser("localize", help="rank symbol sites by crash proximity")
    p.add_argument("--repo", required=True)
    p.add_argument("--symbol", required=True)
    p.add_argument("--report", help="crash report file")
    p.add_argument("-k", type=int, default=5)
    p.set_defaults(func=_cmd_localize)

    p = sub.add_parser("memory", help="memory administration")
    msub = p.add_subparsers(dest="memory_command", required=True)
    mi = msub.add_parser("inspect")
    mi.add_argument("--memory", required=True)
    mi.add_argument("--tier", choices=memory.TIERS)
    mi.add_argument("--project")
    mi.add_argument("--cwe")
    mi.set_defaults(func=_cmd_memory_inspect)
    mp = msub.add_parser("prune")
    mp.add_argument("--memory", required=True)
    mp.add_argument("--window", required=True, help="task count, or 'inf'")
    mp.set_defaults(func=_cmd_memory_prune)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, stream=sys.stderr)
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "repair" and not args.task and not args.tasks:
        print("repair needs a task file or --tasks directory", file=sys.stderr)
        return 2
    try:
        cfg = load_config(Path(args.config) if args.config else None)
    except (OSError, ValueError) as exc:
        print(f"bad config: {exc}", file=sys.stderr)
        return 2
    try:
        return args.func(args, cfg)
    except (
        FileNotFoundError,
        KeyError,
        json.JSONDecodeError,
        UnreadableCorpus,
        CorruptMemoryFile,
        WorkspaceError,
        PristineCheckFailed,
        ValueError,
    ) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
