"""Readers and writers for TREC runs, qrels, JSONL corpora/queries and score files."""

from __future__ import annotations

import json
import logging
import os
import re
from collections import defaultdict
from pathlib import Path
from typing import Iterable, Mapping, Union

from prefilter_rerank.core import (
    Judgment,
    JudgmentSet,
    Passage,
    Query,
    RankedList,
    RelevanceScore,
)

logger = logging.getLogger(__name__)

PathLike = Union[str, os.PathLike]

# Plain decimal or scientific notation; rejects "1_000", "inf", "nan", "1,5".
_DECIMAL = re.compile(r"^[+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?$")
_INTEGER = re.compile(r"^[+-]?\d+$")


class TrecFormatError(ValueError):
    """A malformed line in an input file. ``line_no`` is 1-based."""

    def __init__(self, path, line_no: int, message: str):
        self.path = str(path)
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {message}")


def _parse_decimal(token: str) -> float:
    if not _DECIMAL.match(token):
        raise ValueError(f"not a decimal number: {token!r}")
    return float(token)


def _parse_int(token: str) -> int:
    if not _INTEGER.match(token):
        raise ValueError(f"not an integer: {token!r}")
    return int(token)


def format_score(score: float) -> str:
    return f"{score:.6f}"


def read_run(path: PathLike) -> dict[str, RankedList]:
    """Read a six-column TREC run.

    Entries are ordered by the rank column (file order breaks ties) and then
    renumbered 1..N per query. Columns past the sixth are ignored.
    """
    rows: dict[str, list[tuple[int, int, str, float]]] = defaultdict(list)
    seen: set[tuple[str, str]] = set()
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            fields = line.split()
            if len(fields) < 6:
                raise TrecFormatError(
                    path, line_no, f"expected 6 fields, found {len(fields)}"
                )
            qid, q0, pid, rank_s, score_s = fields[:5]
            if q0 != "Q0":
                raise TrecFormatError(path, line_no, f"second column must be Q0, got {q0!r}")
            try:
                rank = _parse_int(rank_s)
                score = _parse_decimal(score_s)
            except ValueError as exc:
                raise TrecFormatError(path, line_no, str(exc)) from None
            if (qid, pid) in seen:
                raise TrecFormatError(
                    path, line_no, f"duplicate passage {pid!r} for query {qid!r}"
                )
            seen.add((qid, pid))
            rows[qid].append((rank, line_no, pid, score))

    runs = {}
    for qid, items in rows.items():
        items.sort()
        runs[qid] = RankedList.from_ids(
            qid, [pid for _, _, pid, _ in items], [s for _, _, _, s in items]
        )
    return runs


def write_run(lists: Mapping[str, RankedList], tag: str, path: PathLike) -> None:
    """Write runs with queries in lexicographic order and 6-decimal scores."""
    if not tag or any(c.isspace() for c in tag):
        raise ValueError(f"run tag must be a non-empty token, got {tag!r}")
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for qid in sorted(lists):
            for e in lists[qid].entries:
                f.write(f"{qid} Q0 {e.passage_id} {e.rank} {format_score(e.score)} {tag}\n")


def read_qrels(path: PathLike) -> JudgmentSet:
    judgments = []
    pairs: dict[tuple[str, str], tuple[int, int]] = {}
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            fields = line.split()
            if len(fields) < 4:
                raise TrecFormatError(
                    path, line_no, f"expected 4 fields, found {len(fields)}"
                )
            qid, _, pid, level_s = fields[:4]
            try:
                level = _parse_int(level_s)
            except ValueError as exc:
                raise TrecFormatError(path, line_no, str(exc)) from None
            if level < 0:
                raise TrecFormatError(path, line_no, f"negative relevance level {level}")
            prev = pairs.get((qid, pid))
            if prev is not None and prev[0] != level:
                raise TrecFormatError(
                    path,
                    line_no,
                    f"level {level} for ({qid}, {pid}) conflicts with level "
                    f"{prev[0]} on line {prev[1]}",
                )
            pairs.setdefault((qid, pid), (level, line_no))
            judgments.append(Judgment(qid, pid, level))
    return JudgmentSet(judgments)


def write_qrels(judgments: JudgmentSet, path: PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for j in judgments.sorted_judgments():
            f.write(f"{j.query_id} 0 {j.passage_id} {j.level}\n")


def _read_jsonl_records(path: PathLike):
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                logger.warning("%s:%d: blank line skipped", path, line_no)
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TrecFormatError(path, line_no, f"invalid JSON: {exc.msg}") from None
            if not isinstance(obj, dict):
                raise TrecFormatError(path, line_no, "expected a JSON object")
            # BEIR files name the identifier "_id".
            rid = obj.get("id", obj.get("_id"))
            if rid is None or str(rid) == "":
                raise TrecFormatError(path, line_no, "missing 'id'")
            if "text" not in obj:
                raise TrecFormatError(path, line_no, "missing 'text'")
            yield line_no, str(rid), obj


def read_corpus(path: PathLike) -> dict[str, Passage]:
    """Read a JSONL corpus; a non-empty ``title`` is prepended to the text."""
    corpus: dict[str, Passage] = {}
    for line_no, pid, obj in _read_jsonl_records(path):
        if pid in corpus:
            raise TrecFormatError(path, line_no, f"duplicate passage id {pid!r}")
        text = str(obj["text"])
        title = obj.get("title")
        if title:
            text = f"{title} {text}"
        corpus[pid] = Passage(pid, text)
    return corpus


def read_queries(path: PathLike) -> dict[str, Query]:
    queries: dict[str, Query] = {}
    for line_no, qid, obj in _read_jsonl_records(path):
        if qid in queries:
            raise TrecFormatError(path, line_no, f"duplicate query id {qid!r}")
        try:
            queries[qid] = Query(qid, str(obj["text"]))
        except ValueError as exc:
            raise TrecFormatError(path, line_no, str(exc)) from None
    return queries


def write_scores(scores: Iterable[RelevanceScore], path: PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for s in scores:
            f.write(json.dumps(s.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")


def read_scores(path: PathLike) -> dict[tuple[str, str], RelevanceScore]:
    """Read a scores JSONL file into a ``(query_id, passage_id)`` map."""
    out: dict[tuple[str, str], RelevanceScore] = {}
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                s = RelevanceScore.from_dict(json.loads(line))
            except (json.JSONDecodeError, KeyError, ValueError, TypeError) as exc:
                raise TrecFormatError(path, line_no, f"bad score record: {exc}") from None
            key = (s.query_id, s.passage_id)
            if key in out:
                raise TrecFormatError(path, line_no, f"duplicate score for {key}")
            out[key] = s
    return out


def ensure_exists(path: PathLike, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"missing {what}: expected {p}")
    return p


__all__ = [
    "TrecFormatError",
    "format_score",
    "read_run",
    "write_run",
    "read_qrels",
    "write_qrels",
    "read_corpus",
    "read_queries",
    "read_scores",
    "write_scores",
    "ensure_exists",
]
