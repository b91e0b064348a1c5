"""Ranked retrieval over the memory store.

Candidate pools are built in two priority tiers: P1 draws from the same
project (same CWE and language, and strictly older than the query), and P2
widens to other projects (same CWE and language) only when P1 is sparse.
Candidates are scored by embedding cosine similarity on descriptions, with
a lexical token-overlap fallback when the embedding backend is down.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

from .embedding import CachingEmbedder, cosine, jaccard_similarity
from .errors import EmbeddingUnavailable, InvariantViolation
from .memory import (
    L3Entry,
    MemoryEntry,
    MemoryStore,
    RetrievalKeys,
    entry_timestamp,
    query_timestamp,
)

DEFAULT_K_MIN = 2
DEFAULT_TOP_N = 4


class Priority(IntEnum):
    P1 = 1
    P2 = 2


@dataclass(frozen=True)
class Query:
    keys: RetrievalKeys
    k_min: int = DEFAULT_K_MIN
    top_n: int = DEFAULT_TOP_N

    def validate(self) -> None:
        if self.k_min < 1:
            raise InvariantViolation("k_min must be >= 1")
        if self.top_n < self.k_min:
            raise InvariantViolation("top_n must be >= k_min")


@dataclass
class RankedEntry:
    entry: MemoryEntry
    similarity: float
    priority_tier: Priority


def _candidate_text(entry: MemoryEntry, use_fail_patch: bool) -> str:
    if use_fail_patch and isinstance(entry, L3Entry):
        return entry.fail_patch
    return entry.keys.description


def retrieve(
    store: MemoryStore,
    tier: str,
    query: Query,
    query_text_override: str | None = None,
    embedder: CachingEmbedder | None = None,
) -> list[RankedEntry]:
    """Rank one tier's entries for a query.

    Filters: candidates sharing the query's instance id are always
    excluded; P1 additionally requires a strictly older timestamp than the
    query. P2 is added exactly when the filtered P1 pool has fewer than
    ``k_min`` members. Results are ordered by (priority, similarity desc),
    with ties broken by newer timestamp first, then instance id, and the
    list is truncated to ``top_n``.

    ``query_text_override`` carries the failed-patch text during refinement
    retrieval; L3 candidates are then scored against their stored failed
    patches instead of their descriptions.
    """
    query.validate()
    embedder = embedder or store.embedder
    q = query.keys
    q_ts = query_timestamp(q)

    p1: list[MemoryEntry] = []
    p2: list[MemoryEntry] = []
    for entry in store.tier_entries(tier):
        keys = entry.keys
        if keys.instance_id == q.instance_id:
            continue
        if keys.cwe != q.cwe or keys.language != q.language:
            continue
        if keys.project == q.project:
            if entry_timestamp(entry) < q_ts:
                p1.append(entry)
        else:
            p2.append(entry)

    pools = [(Priority.P1, p1)]
    if len(p1) < query.k_min:
        pools.append((Priority.P2, p2))

    query_text = query_text_override if query_text_override is not None else q.description
    use_fail_patch = query_text_override is not None

    scored: list[RankedEntry] = []
    try:
        q_vec = embedder.embed(query_text)
        for priority, pool in pools:
            for entry in pool:
                sim = cosine(q_vec, embedder.embed(_candidate_text(entry, use_fail_patch)))
                scored.append(RankedEntry(entry, sim, priority))
    except EmbeddingUnavailable:
        scored = [
            RankedEntry(entry, jaccard_similarity(query_text, _candidate_text(entry, use_fail_patch)), priority)
            for priority, pool in pools
            for entry in pool
        ]

    def sort_key(r: RankedEntry):
        kind, major, minor = entry_timestamp(r.entry)
        return (
            int(r.priority_tier),
            -r.similarity,
            -kind,
            -major,
            -minor,
            r.entry.keys.instance_id,
        )

    scored.sort(key=sort_key)
    return scored[: query.top_n]
