"""Shared domain types and the relevance-level interpretation policy."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, Optional, Sequence

logger = logging.getLogger(__name__)

# Highest grade used by TREC-DL and the BEIR tasks handled here.
MAX_STANDARD_LEVEL = 3


@dataclass(frozen=True)
class Query:
    id: str
    text: str

    def __post_init__(self):
        if not self.id:
            raise ValueError("query id must be non-empty")
        if not self.text:
            raise ValueError(f"query {self.id!r} has empty text")


@dataclass(frozen=True)
class Passage:
    id: str
    text: str

    def __post_init__(self):
        if not self.id:
            raise ValueError("passage id must be non-empty")


@dataclass(frozen=True)
class Judgment:
    query_id: str
    passage_id: str
    level: int

    def __post_init__(self):
        if self.level < 0:
            raise ValueError(
                f"negative relevance level {self.level} for ({self.query_id}, {self.passage_id})"
            )


class JudgmentSet:
    """Graded judgments keyed by ``(query_id, passage_id)``.

    Identical duplicates collapse to one judgment; a pair judged twice with
    different levels raises ``ValueError``.
    """

    def __init__(self, judgments: Iterable[Judgment] = ()):
        self._by_query: dict[str, dict[str, int]] = {}
        self._size = 0
        for j in judgments:
            per_query = self._by_query.setdefault(j.query_id, {})
            prev = per_query.get(j.passage_id)
            if prev is None:
                per_query[j.passage_id] = j.level
                self._size += 1
                if j.level > MAX_STANDARD_LEVEL:
                    logger.warning(
                        "level %d above %d for (%s, %s); treated as relevant",
                        j.level, MAX_STANDARD_LEVEL, j.query_id, j.passage_id,
                    )
            elif prev != j.level:
                raise ValueError(
                    f"conflicting levels {prev} and {j.level} for "
                    f"({j.query_id}, {j.passage_id})"
                )

    def __len__(self) -> int:
        return self._size

    def __iter__(self) -> Iterator[Judgment]:
        for qid, docs in self._by_query.items():
            for pid, level in docs.items():
                yield Judgment(qid, pid, level)

    def __contains__(self, pair) -> bool:
        qid, pid = pair
        return pid in self._by_query.get(qid, {})

    def __eq__(self, other) -> bool:
        if not isinstance(other, JudgmentSet):
            return NotImplemented
        return self._by_query == other._by_query

    def __repr__(self) -> str:
        return f"JudgmentSet({self._size} judgments, {len(self._by_query)} queries)"

    def level(self, query_id: str, passage_id: str) -> Optional[int]:
        """Grade of the pair, or ``None`` when unjudged."""
        return self._by_query.get(query_id, {}).get(passage_id)

    def for_query(self, query_id: str) -> Mapping[str, int]:
        return dict(self._by_query.get(query_id, {}))

    def query_ids(self) -> list[str]:
        return sorted(self._by_query)

    def max_level(self) -> int:
        levels = [lvl for docs in self._by_query.values() for lvl in docs.values()]
        return max(levels, default=0)

    def sorted_judgments(self) -> list[Judgment]:
        """Judgments in a canonical order, independent of insertion order."""
        return sorted(self, key=lambda j: (j.query_id, j.passage_id))


@dataclass(frozen=True)
class RelevancePolicy:
    """Which qrels grade is the first one counted as relevant.

    ``min_relevant_level=1`` suits BEIR tasks (grade 1 is relevant or
    partially relevant); ``min_relevant_level=2`` suits TREC-DL, where
    grade 1 means "related but not relevant".
    """

    min_relevant_level: int = 1

    def __post_init__(self):
        if self.min_relevant_level not in (1, 2):
            raise ValueError(
                f"min_relevant_level must be 1 or 2, got {self.min_relevant_level}"
            )

    @classmethod
    def beir(cls) -> "RelevancePolicy":
        return cls(1)

    @classmethod
    def trec_dl(cls) -> "RelevancePolicy":
        return cls(2)


def binarize_level(level: int, policy: RelevancePolicy) -> int:
    if level < 0:
        raise ValueError(f"relevance level must be >= 0, got {level}")
    return 1 if level >= policy.min_relevant_level else 0


@dataclass(frozen=True)
class RankedEntry:
    passage_id: str
    score: float
    rank: int


@dataclass(frozen=True)
class RankedList:
    """One query's ranking; ranks run 1..N without gaps and ids are unique."""

    query_id: str
    entries: tuple[RankedEntry, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        seen = set()
        for i, e in enumerate(self.entries, start=1):
            if e.rank != i:
                raise ValueError(
                    f"query {self.query_id}: rank {e.rank} at position {i}, expected {i}"
                )
            if e.passage_id in seen:
                raise ValueError(
                    f"query {self.query_id}: duplicate passage {e.passage_id!r}"
                )
            seen.add(e.passage_id)

    @classmethod
    def from_ids(
        cls,
        query_id: str,
        passage_ids: Sequence[str],
        scores: Optional[Sequence[float]] = None,
    ) -> "RankedList":
        """Build a list in the given order.

        Without explicit scores, synthetic descending scores ``N - rank + 1``
        are assigned so the list is valid as a run file.
        """
        n = len(passage_ids)
        if scores is None:
            scores = [float(n - i) for i in range(n)]
        elif len(scores) != n:
            raise ValueError("scores and passage_ids differ in length")
        return cls(
            query_id,
            tuple(
                RankedEntry(pid, float(s), i)
                for i, (pid, s) in enumerate(zip(passage_ids, scores), start=1)
            ),
        )

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[RankedEntry]:
        return iter(self.entries)

    @property
    def passage_ids(self) -> list[str]:
        return [e.passage_id for e in self.entries]

    def subset(self, passage_ids: Iterable[str]) -> "RankedList":
        """Keep the given passages in their current relative order, renumbered."""
        keep = set(passage_ids)
        kept = [e for e in self.entries if e.passage_id in keep]
        return RankedList.from_ids(
            self.query_id, [e.passage_id for e in kept], [e.score for e in kept]
        )

    def head(self, n: int) -> "RankedList":
        return RankedList(self.query_id, self.entries[:n])

    def scores_non_increasing(self) -> bool:
        return all(a.score >= b.score for a, b in zip(self.entries, self.entries[1:]))


@dataclass(frozen=True)
class RelevanceScore:
    """LLM relevance estimate for one pair.

    ``fallback`` marks scores that were never parsed from a response and were
    filled in by policy; they are excluded from threshold calibration.
    """

    query_id: str
    passage_id: str
    value: float
    raw_response: Optional[str] = field(default=None, compare=False)
    fallback: bool = False

    def __post_init__(self):
        if not 0.0 <= self.value <= 1.0:
            raise ValueError(f"relevance score {self.value} outside [0, 1]")

    def to_dict(self) -> dict:
        return {
            "query_id": self.query_id,
            "passage_id": self.passage_id,
            "value": self.value,
            "fallback": self.fallback,
            "raw_response": self.raw_response,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "RelevanceScore":
        return cls(
            str(d["query_id"]),
            str(d["passage_id"]),
            float(d["value"]),
            d.get("raw_response"),
            bool(d.get("fallback", False)),
        )


def truncate_words(text: str, budget: Optional[int]) -> tuple[str, bool]:
    """Cut ``text`` to its first ``budget`` whitespace-delimited words."""
    if budget is None:
        return text, False
    words = text.split()
    if len(words) <= budget:
        return text, False
    return " ".join(words[:budget]), True
